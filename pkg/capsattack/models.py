from typing import Optional, Union

from capsattack.baselines import CNNBaseline
from capsattack.capsnet import CapsNet
from capsattack.config import BaselineConfig, CapsNetConfig, ReconNetConfig
from capsattack.enums import ModelKind, Precision
from capsattack.errors import ConfigError

__all__ = ("Model", "build_model", "model_from_description")

Model = Union[CapsNet, CNNBaseline]


def build_model(
    kind: Union[ModelKind, str] = ModelKind.capsnet,
    architecture: str = "toy",
    recon: Optional[str] = "toy",
    seed: int = 0,
    precision: Union[Precision, str] = Precision.single,
) -> Model:
    """
    Build a freshly initialised model from the presets.

    Args:
        kind:
            capsnet, cnn-cr or cnn-r.
        architecture:
            Name of a `models` preset (capsule networks) or `baselines` preset.
        recon:
            Name of a `recon` preset, or None for a model without reconstruction.
        seed:
            Seed of the weight initialisation.
        precision:
            single or double.
    """
    try:
        kind = ModelKind(kind)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    recon_config = None if recon is None else ReconNetConfig.preset(recon)
    if kind is ModelKind.capsnet:
        model = CapsNet(CapsNetConfig.preset(architecture), recon_config, seed=seed)
    else:
        model = CNNBaseline(BaselineConfig.preset(architecture), kind, recon_config, seed=seed)
    return model.to_precision(precision)


def model_from_description(description: dict) -> Model:
    """Rebuild an (untrained) model from the dictionary `describe()` returns."""
    try:
        kind = ModelKind(description["kind"])
        recon = description.get("recon")
        recon_config = None if recon is None else ReconNetConfig.from_dict(recon)
        seed = int(description.get("seed", 0))
        if kind is ModelKind.capsnet:
            return CapsNet(CapsNetConfig.from_dict(description["config"]), recon_config, seed=seed)
        return CNNBaseline(BaselineConfig.from_dict(description["config"]), kind, recon_config, seed=seed)
    except (KeyError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid model description: {e}") from None

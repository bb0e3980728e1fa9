from .csi import (
    ANGLE_DELAY,
    ANTENNA_SUBCARRIER,
    CsiTensor,
    Fingerprint,
    NormStats,
    angle_delay,
    angle_delay_inverse,
    attenuate_peak_block,
    attenuate_strongest,
    from_angle_delay,
    synth_channel,
    synth_channels,
    to_angle_delay,
    to_fingerprint,
)
from .dataset import Dataset, Sample, ScenarioSpec, gen_dataset, import_fingerprints, split_sizes
from .environment import (
    SPEED_OF_LIGHT,
    AnchorGeometry,
    Environment,
    Scatterer,
    default_environment,
    load_environment,
    save_environment,
)

__all__ = [
    "ANGLE_DELAY",
    "ANTENNA_SUBCARRIER",
    "SPEED_OF_LIGHT",
    "AnchorGeometry",
    "CsiTensor",
    "Dataset",
    "Environment",
    "Fingerprint",
    "NormStats",
    "Sample",
    "Scatterer",
    "ScenarioSpec",
    "angle_delay",
    "angle_delay_inverse",
    "attenuate_peak_block",
    "attenuate_strongest",
    "default_environment",
    "from_angle_delay",
    "gen_dataset",
    "import_fingerprints",
    "load_environment",
    "save_environment",
    "split_sizes",
    "synth_channel",
    "synth_channels",
    "to_angle_delay",
    "to_fingerprint",
]

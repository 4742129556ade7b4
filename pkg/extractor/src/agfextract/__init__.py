"""Offline SE-ResNeXt-50 stage-activation dumper writing AGF1 feature files."""

from .extract import extract_directory
from .model import SEResNeXt50, WeightDownloadError, build_model, stage_names
from .writer import write_agf1

__version__ = "0.1.0"

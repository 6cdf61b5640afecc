"""Value-weighted stochastic transfer of tiled images over lossy datagram links."""

from .model import (ChannelParams, FeasibilityReport, Requirements, SizingParams,
                    TransmissionPlan, ValueMap, arrival_probability, feasibility_check,
                    make_plan, min_probability_for, normalize_values, plan_transmission,
                    transmission_count, uniform_values, values_from_heatmap,
                    values_from_requirements)
from .image import BlockGrid, ImageBuffer, PartialImage, reassemble, tile, untile
from .protocol import Receiver, Sender, run_simulated_session

__version__ = "0.1.0"

__all__ = [
    "ChannelParams", "FeasibilityReport", "Requirements", "SizingParams", "TransmissionPlan",
    "ValueMap", "arrival_probability", "feasibility_check", "make_plan",
    "min_probability_for", "normalize_values", "plan_transmission", "transmission_count",
    "uniform_values", "values_from_heatmap", "values_from_requirements",
    "BlockGrid", "ImageBuffer", "PartialImage", "reassemble", "tile", "untile",
    "Receiver", "Sender", "run_simulated_session",
]

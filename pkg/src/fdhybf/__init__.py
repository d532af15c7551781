"""Hybrid beamforming for multicell full-duplex mmWave networks."""
import os as _os

if _os.environ.get("HYBF_DETERMINISTIC", "") not in ("", "0"):
    # effective only if numpy has not been imported yet
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from .errors import *  # noqa: E402,F401,F403
from .scenario import (ChannelSet, NetworkConfig, draw_network_channels, load_config,  # noqa: E402
                       make_rng, profile)
from .model import BeamformerState, NoiseProfile, Weights, wsr  # noqa: E402
from .chybf import SolverTrace, run_c_hybf  # noqa: E402
from .pdhybf import FeedbackMessage, run_pd_hybf  # noqa: E402
from .baselines import GainReport, gain, run_fully_digital_fd, run_fully_digital_hd  # noqa: E402
from .harness import ExperimentRecord, read_csv, run_experiment, write_csv  # noqa: E402

__version__ = "0.1.0"

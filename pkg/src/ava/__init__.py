"""Continuous window-level speaker verification with HMMs.

Submodules: ``frontend`` (MFCC, CMS, VAD), ``hmm`` (short-time Baum-Welch,
sliding Viterbi), ``adapt`` (MAP), ``mve`` (discriminative GPD training),
``stream`` (per-window decisions), ``evaluation`` (WEER, voting, synthetic
corpora), ``workflow`` and ``cli``.
"""
from .errors import AvaError
from .frontend import FeatureSequence, FrameConfig, compute_mfcc, vad
from .hmm import Hmm, WindowSpec, baum_welch_short, sliding_viterbi
from .adapt import MapConfig, map_adapt
from .mve import MveConfig, SpeakerModelPair, gpd_train
from .stream import authenticate_stream
from .evaluation import synth_corpus, weer

__version__ = "0.1.0"

__all__ = [
    "AvaError", "FeatureSequence", "FrameConfig", "compute_mfcc", "vad",
    "Hmm", "WindowSpec", "baum_welch_short", "sliding_viterbi",
    "MapConfig", "map_adapt", "MveConfig", "SpeakerModelPair", "gpd_train",
    "authenticate_stream", "synth_corpus", "weer",
]
